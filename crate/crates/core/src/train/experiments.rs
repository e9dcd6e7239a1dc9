//! Multi-seed experiment harnesses: the configuration ablation, the
//! auxiliary-head probe and the pretrained-vs-scratch comparison.

use super::config::TrainConfig;
use super::metrics::EvalResult;
use super::pretrain::{pretrain_backbone, PretrainConfig};
use super::trainer::{evaluate, Head, Trainer};
use crate::config::KeyValue;
use crate::data::{Dataset, SceneSpec};
use crate::model::{BarrierSet, BarrierSite, Hfgd, ModelConfig, Upsampler, BACKBONE_PREFIX};
use crate::nn::Checkpoint;
use crate::par;
use crate::tensor::{invalid, Result};

pub const TRAIN_SEED_BASE: u64 = 0;
pub const EVAL_SEED_BASE: u64 = 1 << 32;

/// A fixed train/eval split drawn from one scene spec.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Dataset,
    pub eval: Dataset,
}

impl Benchmark {
    pub fn new(spec: &SceneSpec, n_train: usize, n_eval: usize) -> Self {
        Benchmark {
            train: Dataset::generate(n_train, TRAIN_SEED_BASE, spec),
            eval: Dataset::generate(n_eval, EVAL_SEED_BASE, spec),
        }
    }

    /// 512 train / 128 eval scenes.
    pub fn desk(spec: &SceneSpec) -> Self {
        Benchmark::new(spec, 512, 128)
    }
}

/// How the backbone starts out.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Scratch,
    /// Pretrain on scene classification first, with the run's seed.
    Pretrained(PretrainConfig),
    /// Backbones already pretrained, one per seed in the order the seeds
    /// are passed, so several experiments can share them.
    Given(Vec<Checkpoint>),
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub student: EvalResult,
    pub teacher: EvalResult,
    pub final_total_loss: f64,
}

/// Trains one model from `seed` and evaluates both heads.
pub fn run_segmentation(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    bench: &Benchmark,
    backbone: Option<&Checkpoint>,
    barriers: Option<BarrierSet>,
) -> Result<RunResult> {
    let (mut model, mut store) = Hfgd::new(model_cfg, train_cfg.seed).map_err(|e| invalid("run", e.to_string()))?;
    if let Some(ck) = backbone {
        ck.apply(&mut store, BACKBONE_PREFIX, true)
            .map_err(|e| invalid("run", e.to_string()))?;
    }
    if let Some(b) = barriers {
        model.barriers = b;
    }
    let mut trainer = Trainer::new(model, store, train_cfg.clone());
    let mut last = f64::NAN;
    trainer.run(&bench.train, |_, r| last = r.total)?;
    Ok(RunResult {
        student: evaluate(&trainer.model, &trainer.store, &bench.eval, Head::Student)?,
        teacher: evaluate(&trainer.model, &trainer.store, &bench.eval, Head::Teacher)?,
        final_total_loss: last,
    })
}

/// Pretrained backbones per seed (`None` for scratch), in `seeds` order.
pub fn backbones(init: &Init, model_cfg: &ModelConfig, spec: &SceneSpec, seeds: &[u64]) -> Result<Vec<Option<Checkpoint>>> {
    match init {
        Init::Scratch => Ok(vec![None; seeds.len()]),
        Init::Pretrained(p) => par::map(seeds.len(), |i| {
            let cfg = PretrainConfig { seed: seeds[i], ..p.clone() };
            pretrain_backbone(model_cfg.backbone_stage_channels, spec, &cfg).map(|r| Some(r.checkpoint))
        })
        .into_iter()
        .collect(),
        Init::Given(cks) if cks.len() == seeds.len() => Ok(cks.iter().cloned().map(Some).collect()),
        Init::Given(cks) => Err(invalid(
            "backbones",
            format!("{} backbones given for {} seeds", cks.len(), seeds.len()),
        )),
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub model: ModelConfig,
}

/// The ten configuration rows. `base` supplies everything the rows do
/// not toggle (classes, widths, CAR weight).
pub fn ablation_rows(base: &ModelConfig) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for cae in [false, true] {
        let enc = if cae { "cae" } else { "identity" };
        for (label, guidance, aa) in [("sfpn", false, false), ("sfpn+guidance", true, false), ("sfpn+aa", false, true), ("sfpn+hfgm", true, true)] {
            rows.push(AblationRow {
                name: format!("{label}/{enc}"),
                model: ModelConfig {
                    upsampler: Upsampler::Sfpn,
                    target_os: 4,
                    cae_enabled: cae,
                    hfg_guidance_enabled: guidance,
                    hfgm_aa_enabled: aa,
                    lateral_stop_grad_enabled: guidance,
                    ..base.clone()
                },
            });
        }
    }
    for os in [4, 2] {
        rows.push(AblationRow {
            name: format!("usfpn+hfgm/cae@os{os}"),
            model: ModelConfig {
                upsampler: Upsampler::Usfpn,
                target_os: os,
                cae_enabled: true,
                hfg_guidance_enabled: true,
                hfgm_aa_enabled: true,
                lateral_stop_grad_enabled: true,
                ..base.clone()
            },
        });
    }
    rows
}

/// Full-scale reference deltas (mIoU points), printed beside the observed ones:
/// `(label, minuend row, subtrahend row, delta)`.
pub const REFERENCE_DELTAS: [(&str, &str, &str, f64); 4] = [
    ("full-HFGM gain", "sfpn+hfgm/identity", "sfpn/identity", 1.80),
    ("CAE-context gain", "sfpn+hfgm/cae", "sfpn+hfgm/identity", 1.52),
    ("U-SFPN gain", "usfpn+hfgm/cae@os4", "sfpn+hfgm/cae", 0.48),
    ("OS=2 gain", "usfpn+hfgm/cae@os2", "usfpn+hfgm/cae@os4", 0.7),
];

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub row: String,
    pub seed: u64,
    pub result: RunResult,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    /// Row-major: `cells[r * seeds.len() + s]`.
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn row_index(&self, name: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.name == name)
    }

    pub fn cells_of(&self, row: usize) -> &[AblationCell] {
        let n = self.seeds.len();
        &self.cells[row * n..(row + 1) * n]
    }

    pub fn mious(&self, row: usize) -> Vec<f64> {
        self.cells_of(row).iter().map(|c| c.result.student.miou).collect()
    }

    pub fn median_miou(&self, name: &str) -> Option<f64> {
        self.row_index(name).map(|r| median(&self.mious(r)))
    }

    pub fn median_class_iou(&self, name: &str, class: usize) -> Option<f64> {
        let r = self.row_index(name)?;
        let v: Vec<f64> = self
            .cells_of(r)
            .iter()
            .map(|c| c.result.student.per_class_iou.get(class).copied().flatten().unwrap_or(0.0))
            .collect();
        Some(median(&v))
    }

    /// `row,seed_<s>...,median`: one line per row.
    pub fn wide_csv(&self) -> String {
        let mut s = String::from("row");
        for seed in &self.seeds {
            s.push_str(&format!(",seed_{seed}"));
        }
        s.push_str(",median\n");
        for (r, row) in self.rows.iter().enumerate() {
            s.push_str(&row.name);
            let m = self.mious(r);
            for v in &m {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push_str(&format!(",{:.6}\n", median(&m)));
        }
        s
    }

    /// `row,seed,miou,pixel_acc,teacher_miou,iou_0..`: one line per run.
    pub fn long_csv(&self) -> String {
        let c = self.rows.first().map_or(0, |r| r.model.num_classes);
        let mut s = String::from("row,seed,miou,pixel_acc,teacher_miou");
        for k in 0..c {
            s.push_str(&format!(",iou_{k}"));
        }
        s.push('\n');
        for cell in &self.cells {
            let st = &cell.result.student;
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}",
                cell.row, cell.seed, st.miou, st.pixel_acc, cell.result.teacher.miou
            ));
            for iou in &st.per_class_iou {
                match iou {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Observed median deltas next to the reference ones.
    pub fn deltas_text(&self) -> String {
        let mut s = String::from("# comparison\tobserved_median_delta\treference_delta\n");
        for (label, a, b, reference) in REFERENCE_DELTAS {
            if let (Some(x), Some(y)) = (self.median_miou(a), self.median_miou(b)) {
                s.push_str(&format!("{label}\t{:+.4}\t{reference:+.2}\n", (x - y) * 100.0));
            }
        }
        s
    }
}

/// Trains every row on every seed; runs are independent and may execute
/// in parallel, results are assembled in row-major order.
pub fn run_ablation(
    rows: &[AblationRow],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    bench: &Benchmark,
    init: &Init,
) -> Result<AblationTable> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(invalid("ablation", "need at least one row and one seed"));
    }
    let spec = &bench.train.spec;
    let inits = backbones(init, &rows[0].model, spec, seeds)?;
    let n = seeds.len();
    let jobs = par::map(rows.len() * n, |j| {
        let (r, s) = (j / n, j % n);
        let tc = TrainConfig { seed: seeds[s], ..train_cfg.clone() };
        run_segmentation(&rows[r].model, &tc, bench, inits[s].as_ref(), None).map(|result| AblationCell {
            row: rows[r].name.clone(),
            seed: seeds[s],
            result,
        })
    });
    Ok(AblationTable {
        rows: rows.to_vec(),
        seeds: seeds.to_vec(),
        cells: jobs.into_iter().collect::<Result<_>>()?,
    })
}

/// Every row configuration survives a text round-trip and validation.
pub fn rows_round_trip(rows: &[AblationRow]) -> bool {
    rows.iter()
        .all(|r| ModelConfig::from_text(&r.model.to_text()).is_ok_and(|m| m == r.model))
}

// ------------------------------------------------------------------- probe

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeVariant {
    /// The high-level head alone.
    FcnOnly,
    /// Segmentation upsampler plus the auxiliary head, both training the backbone.
    Joint,
    /// As `Joint`, with the auxiliary head's gradient stopped at the backbone.
    JointStopped,
}

impl ProbeVariant {
    pub const ALL: [ProbeVariant; 3] = [ProbeVariant::FcnOnly, ProbeVariant::Joint, ProbeVariant::JointStopped];

    pub fn name(self) -> &'static str {
        match self {
            ProbeVariant::FcnOnly => "fcn_only",
            ProbeVariant::Joint => "sfpn+aux",
            ProbeVariant::JointStopped => "sfpn+aux_stopped",
        }
    }

    /// Model, train settings and barriers for this variant.
    pub fn setup(self, base: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig, BarrierSet) {
        let model = ModelConfig {
            num_classes: base.num_classes,
            width_mult: base.width_mult,
            backbone_stage_channels: base.backbone_stage_channels,
            ..ModelConfig::sfpn_baseline()
        };
        let mut tc = train.clone();
        let mut barriers = BarrierSet::from_config(&model);
        match self {
            ProbeVariant::FcnOnly => tc.lambda_student = 0.0,
            ProbeVariant::Joint => {}
            ProbeVariant::JointStopped => barriers = barriers.with(BarrierSite::TeacherInput, true),
        }
        (model, tc, barriers)
    }

    /// Full-scale reference mIoU of the auxiliary head for this variant.
    pub fn reference_aux_miou(self) -> f64 {
        match self {
            ProbeVariant::FcnOnly => 45.87,
            ProbeVariant::Joint => 44.35,
            ProbeVariant::JointStopped => 40.04,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub variant: ProbeVariant,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aux_miou: f64,
    /// For the FCN-only run the auxiliary head is the main head.
    pub main_miou: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub runs: Vec<ProbeRun>,
}

impl ProbeReport {
    pub fn median_aux(&self, v: ProbeVariant) -> f64 {
        let xs: Vec<f64> = self.runs.iter().filter(|r| r.variant == v).map(|r| r.aux_miou).collect();
        median(&xs)
    }

    pub fn median_main(&self, v: ProbeVariant) -> f64 {
        let xs: Vec<f64> = self.runs.iter().filter(|r| r.variant == v).map(|r| r.main_miou).collect();
        median(&xs)
    }

    /// Whether the median auxiliary mIoU follows fcn-only >= joint >= stopped.
    pub fn ordering_holds(&self) -> bool {
        let [a, b, c] = ProbeVariant::ALL.map(|v| self.median_aux(v));
        a >= b && b >= c
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# variant\tmedian_aux_miou\tmedian_main_miou\treference_aux_miou\n");
        for v in ProbeVariant::ALL {
            s.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.2}\n",
                v.name(),
                self.median_aux(v),
                self.median_main(v),
                v.reference_aux_miou()
            ));
        }
        s.push_str(&format!("# ordering fcn_only >= sfpn+aux >= sfpn+aux_stopped: {}\n", self.ordering_holds()));
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,aux_miou,main_miou\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.variant.name(), r.seed, r.aux_miou, r.main_miou));
        }
        s
    }
}

/// Three variants per seed on shared data and shared data order.
pub fn aux_probe_experiment(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    bench: &Benchmark,
    seeds: &[u64],
    init: &Init,
) -> Result<ProbeReport> {
    let inits = backbones(init, base, &bench.train.spec, seeds)?;
    let n = seeds.len();
    let runs = par::map(3 * n, |j| {
        let (v, s) = (ProbeVariant::ALL[j / n], j % n);
        let (model, mut tc, barriers) = v.setup(base, train_cfg);
        tc.seed = seeds[s];
        let r = run_segmentation(&model, &tc, bench, inits[s].as_ref(), Some(barriers))?;
        let aux = r.teacher.miou;
        Ok(ProbeRun {
            variant: v,
            seed: seeds[s],
            model,
            train: tc,
            aux_miou: aux,
            main_miou: if v == ProbeVariant::FcnOnly { aux } else { r.student.miou },
        })
    });
    Ok(ProbeReport {
        runs: runs.into_iter().collect::<Result<_>>()?,
    })
}

// ------------------------------------------------------- pretrained vs scratch

pub const REFERENCE_PRETRAINED_MIOU: f64 = 45.87;
pub const REFERENCE_SCRATCH_MIOU: f64 = 26.13;

#[derive(Clone, Debug)]
pub struct InitComparison {
    pub seeds: Vec<u64>,
    pub pretrained: Vec<f64>,
    pub scratch: Vec<f64>,
}

impl InitComparison {
    pub fn to_text(&self) -> String {
        let mut s = String::from("init,seed,miou\n");
        for (i, seed) in self.seeds.iter().enumerate() {
            s.push_str(&format!("pretrained,{seed},{:.6}\n", self.pretrained[i]));
            s.push_str(&format!("scratch,{seed},{:.6}\n", self.scratch[i]));
        }
        s.push_str(&format!(
            "# median pretrained {:.4} vs scratch {:.4} (reference {REFERENCE_PRETRAINED_MIOU} vs {REFERENCE_SCRATCH_MIOU})\n",
            median(&self.pretrained),
            median(&self.scratch)
        ));
        s
    }
}

/// Same model, data and seeds; only the backbone initialization differs.
pub fn pretrained_vs_scratch(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    bench: &Benchmark,
    seeds: &[u64],
    pretrained: &Init,
) -> Result<InitComparison> {
    if *pretrained == Init::Scratch {
        return Err(invalid("pretrained_vs_scratch", "the pretrained side needs a backbone"));
    }
    let inits = backbones(pretrained, model_cfg, &bench.train.spec, seeds)?;
    let n = seeds.len();
    let mious = par::map(2 * n, |j| {
        let s = j % n;
        let tc = TrainConfig { seed: seeds[s], ..train_cfg.clone() };
        let ck = if j < n { inits[s].as_ref() } else { None };
        run_segmentation(model_cfg, &tc, bench, ck, None).map(|r| r.student.miou)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(InitComparison {
        seeds: seeds.to_vec(),
        pretrained: mious[..n].to_vec(),
        scratch: mious[n..].to_vec(),
    })
}

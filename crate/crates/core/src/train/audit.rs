//! Gradient-topology audit: for each loss term and parameter group, does a
//! barrier-free path exist, and how large is the gradient actually?

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::trainer::{loss_terms, LossWeights};
use crate::data::{generate_sample, make_batch, Batch, SceneSpec};
use crate::model::{stage_group, BarrierSet, BarrierSite, Hfgd, GROUP_AA, GROUP_CAE, GROUP_TOKENS, GROUP_USFPN};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::{backward_with, graph_reachability, BackwardOptions, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    TeacherCe,
    StudentCe,
    CarIntra,
    CarInter,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::TeacherCe, LossTerm::StudentCe, LossTerm::CarIntra, LossTerm::CarInter];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::TeacherCe => "teacher_ce",
            LossTerm::StudentCe => "student_ce",
            LossTerm::CarIntra => "car_intra",
            LossTerm::CarInter => "car_inter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// No barrier-free path from the loss to the group.
    ZeroByTopology,
    Nonzero,
    /// Reachable, yet every observed gradient was exactly zero.
    ZeroButReachable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::ZeroByTopology => "zero-by-topology",
            Verdict::Nonzero => "nonzero",
            Verdict::ZeroButReachable => "zero-but-reachable",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub term: LossTerm,
    pub group: String,
    pub reachable: bool,
    pub max_abs_grad: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAuditReport {
    pub entries: Vec<AuditEntry>,
    pub batches: usize,
}

/// `n` batches of freshly drawn scenes with random seeds and flips.
pub fn fuzz_batches(n: usize, batch_size: usize, spec: &SceneSpec, seed: u64) -> Vec<Batch> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let samples: Vec<_> = (0..batch_size).map(|_| generate_sample(rng.gen(), spec)).collect();
            let flips: Vec<bool> = (0..batch_size).map(|_| rng.gen_bool(0.5)).collect();
            make_batch(&samples.iter().collect::<Vec<_>>(), &flips)
        })
        .collect()
}

/// Groups in reporting order; only those present in `store` are returned.
pub fn audit_groups(store: &ParamStore) -> Vec<String> {
    let present = store.groups();
    let mut order: Vec<String> = (0..4).map(stage_group).collect();
    order.extend([GROUP_CAE, GROUP_TOKENS, GROUP_USFPN, GROUP_AA].map(String::from));
    order.into_iter().filter(|g| present.contains(g)).collect()
}

impl GradAuditReport {
    pub fn get(&self, term: LossTerm, group: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.term == term && e.group == group)
    }

    /// Entries whose static verdict says zero but whose gradient was not.
    pub fn soundness_violations(&self) -> Vec<&AuditEntry> {
        self.entries
            .iter()
            .filter(|e| !e.reachable && e.max_abs_grad != 0.0)
            .collect()
    }

    /// One line per (loss term, group).
    pub fn to_text(&self) -> String {
        let mut s = format!("# gradient audit over {} batch(es)\n", self.batches);
        s.push_str("# term\tgroup\treachable\tmax_abs_grad\tverdict\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:e}\t{}\n",
                e.term.name(),
                e.group,
                e.reachable,
                e.max_abs_grad,
                e.verdict
            ));
        }
        s
    }

    /// `(term, group, before, after)` for every changed verdict.
    pub fn diff<'a>(&'a self, other: &'a GradAuditReport) -> Vec<(LossTerm, &'a str, Verdict, Verdict)> {
        let mut out = Vec::new();
        for e in &self.entries {
            if let Some(o) = other.get(e.term, &e.group) {
                if o.verdict != e.verdict {
                    out.push((e.term, e.group.as_str(), e.verdict, o.verdict));
                }
            }
        }
        out
    }
}

fn term_tensor(terms: &super::trainer::LossTerms, t: LossTerm) -> Option<&Tensor> {
    match t {
        LossTerm::TeacherCe => terms.teacher.as_ref(),
        LossTerm::StudentCe => terms.student.as_ref(),
        LossTerm::CarIntra => terms.car_intra.as_ref(),
        LossTerm::CarInter => terms.car_inter.as_ref(),
    }
}

/// Runs every loss term separately over `batches` (train-mode forward) and
/// aggregates per group: reachable if any batch has a path, max-abs over
/// all batches and parameters of the group.
pub fn grad_audit(model: &Hfgd, store: &ParamStore, batches: &[Batch]) -> Result<GradAuditReport> {
    let groups = audit_groups(store);
    let params = store.trainable();
    let group_of: Vec<String> = params
        .iter()
        .map(|p| store.entry(p.param_id().expect("leaf")).group.clone())
        .collect();
    let mut acc: Vec<(LossTerm, String, bool, f64)> = Vec::new();
    for batch in batches {
        let ctx = Ctx::new(store, Mode::Train);
        let terms = loss_terms(model, &ctx, batch, LossWeights::all())?;
        for term in LossTerm::ALL {
            let Some(loss) = term_tensor(&terms, term) else { continue };
            let reach = graph_reachability(loss);
            let grads = backward_with(loss, &params, BackwardOptions { retain_graph: true })?;
            for g in &groups {
                let mut reachable = false;
                let mut max_abs = 0.0_f64;
                for (p, pg) in params.iter().zip(&group_of) {
                    if pg != g {
                        continue;
                    }
                    reachable |= reach.reaches(p);
                    max_abs = max_abs.max(grads.get(p).map_or(0.0, |e| e.max_abs()));
                }
                match acc.iter_mut().find(|(t, gg, _, _)| *t == term && gg == g) {
                    Some(slot) => {
                        slot.2 |= reachable;
                        slot.3 = slot.3.max(max_abs);
                    }
                    None => acc.push((term, g.clone(), reachable, max_abs)),
                }
            }
        }
    }
    let entries = acc
        .into_iter()
        .map(|(term, group, reachable, max_abs_grad)| AuditEntry {
            verdict: match (reachable, max_abs_grad > 0.0) {
                (false, _) => Verdict::ZeroByTopology,
                (true, true) => Verdict::Nonzero,
                (true, false) => Verdict::ZeroButReachable,
            },
            term,
            group,
            reachable,
            max_abs_grad,
        })
        .collect();
    Ok(GradAuditReport {
        entries,
        batches: batches.len(),
    })
}

/// A claim of the form "this term cannot reach this group".
#[derive(Clone, Debug, PartialEq)]
pub struct ClaimCheck {
    pub term: LossTerm,
    pub group: String,
    pub holds: bool,
    pub detail: String,
}

/// The isolation claims implied by a barrier wiring: the teacher terms
/// never reach the upsampler, and with the student barriers in place the
/// student never reaches the backbone, encoder or tokens. Claims about
/// groups absent from the report are dropped.
pub fn topology_claims(barriers: &BarrierSet, report: &GradAuditReport) -> Vec<ClaimCheck> {
    let mut want: Vec<(LossTerm, String)> = Vec::new();
    for term in [LossTerm::TeacherCe, LossTerm::CarIntra, LossTerm::CarInter] {
        for g in [GROUP_USFPN, GROUP_AA] {
            want.push((term, g.to_string()));
        }
    }
    let b = barriers;
    let student_cut = b.lateral4 && b.lateral8 && b.lateral16 && b.teacher_feat;
    if student_cut {
        for i in 0..4 {
            want.push((LossTerm::StudentCe, stage_group(i)));
        }
        want.push((LossTerm::StudentCe, GROUP_CAE.to_string()));
    }
    if b.tokens {
        want.push((LossTerm::StudentCe, GROUP_TOKENS.to_string()));
    }
    want.into_iter()
        .filter_map(|(term, group)| {
            let e = report.get(term, &group)?;
            let holds = e.verdict == Verdict::ZeroByTopology && e.max_abs_grad == 0.0;
            Some(ClaimCheck {
                detail: format!("{} -> {}: {} (max |g| = {:e})", term.name(), group, e.verdict, e.max_abs_grad),
                term,
                group,
                holds,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MutationResult {
    pub site: BarrierSite,
    /// Verdicts that went from zero-by-topology to something else.
    pub flipped: Vec<(LossTerm, String, Verdict)>,
}

/// Removes each topology barrier in turn and records which zero verdicts
/// of the intact model stop holding.
pub fn mutation_test(model: &Hfgd, store: &ParamStore, batches: &[Batch]) -> Result<Vec<MutationResult>> {
    let intact = grad_audit(model, store, batches)?;
    let mut out = Vec::new();
    for site in BarrierSite::TOPOLOGY {
        let mut mutant = model.clone();
        mutant.barriers = mutant.barriers.with(site, false);
        let r = grad_audit(&mutant, store, batches)?;
        let flipped = intact
            .diff(&r)
            .into_iter()
            .filter(|(_, _, before, _)| *before == Verdict::ZeroByTopology)
            .map(|(t, g, _, after)| (t, g.to_string(), after))
            .collect();
        out.push(MutationResult { site, flipped });
    }
    Ok(out)
}

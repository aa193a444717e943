//! Finite-difference audit of every analytic gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{build_backbone, AdapterNet, AdapterParams, NetSpec};
use crate::objectives::{
    ensemble_kd_loss, individual_kd_loss, kd_grad_student, kd_grad_teacher, kd_loss, local_loss,
    personal_objective, relaxed_global_objective, KdSide, RelaxedObjective,
};
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::tensor_nn::{finite_diff_grad, relative_error, Batch, Matrix, ParamVector};

pub const AUDIT_EPS: f64 = 1e-5;
const ERROR_FLOOR: f64 = 1e-8;
const KINK_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditTarget {
    LocalLoss,
    KdGradStudent,
    KdGradTeacher,
    EnsembleKdLoss,
    IndividualKdStudent,
    IndividualKdTeacher,
    PersonalObjective,
    RelaxedObjectiveTheta,
    RelaxedObjectiveW,
}

impl AuditTarget {
    pub const ALL: [AuditTarget; 9] = [
        AuditTarget::LocalLoss,
        AuditTarget::KdGradStudent,
        AuditTarget::KdGradTeacher,
        AuditTarget::EnsembleKdLoss,
        AuditTarget::IndividualKdStudent,
        AuditTarget::IndividualKdTeacher,
        AuditTarget::PersonalObjective,
        AuditTarget::RelaxedObjectiveTheta,
        AuditTarget::RelaxedObjectiveW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditTarget::LocalLoss => "local_loss",
            AuditTarget::KdGradStudent => "kd_grad_student",
            AuditTarget::KdGradTeacher => "kd_grad_teacher",
            AuditTarget::EnsembleKdLoss => "ensemble_kd_loss",
            AuditTarget::IndividualKdStudent => "individual_kd_loss[student]",
            AuditTarget::IndividualKdTeacher => "individual_kd_loss[teacher]",
            AuditTarget::PersonalObjective => "personal_objective",
            AuditTarget::RelaxedObjectiveTheta => "relaxed_global_objective[theta]",
            AuditTarget::RelaxedObjectiveW => "relaxed_global_objective[w]",
        }
    }
}

impl fmt::Display for AuditTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuditTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AuditTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown audit target `{s}`")))
    }
}

type AdapterGrad = Result<(f64, AdapterParams)>;
type LogitGrad = fn(&[f64], &[f64], f64) -> Result<Vec<f64>>;

/// The gradient kernels under audit, as replaceable function pointers.
#[derive(Clone, Copy)]
pub struct GradientSuite {
    pub local_loss: fn(&AdapterNet, &AdapterParams, &Batch) -> AdapterGrad,
    pub kd_grad_student: LogitGrad,
    pub kd_grad_teacher: LogitGrad,
    pub ensemble_kd_loss: fn(&AdapterNet, &[AdapterParams], &AdapterParams, &Matrix, f64) -> AdapterGrad,
    pub individual_kd_loss: fn(&AdapterNet, &AdapterParams, &AdapterParams, &Matrix, f64, KdSide) -> AdapterGrad,
    pub personal_objective: fn(&AdapterNet, &AdapterParams, &AdapterParams, &Batch, f64) -> AdapterGrad,
    pub relaxed_global_objective:
        fn(&AdapterNet, &AdapterParams, &AdapterParams, &Batch, &Matrix, f64, f64) -> Result<RelaxedObjective>,
}

impl GradientSuite {
    pub fn reference() -> Self {
        Self {
            local_loss,
            kd_grad_student,
            kd_grad_teacher,
            ensemble_kd_loss,
            individual_kd_loss,
            personal_objective,
            relaxed_global_objective,
        }
    }

    /// The reference suite with the gradient of `target` sign-flipped.
    pub fn with_sign_flip(target: AuditTarget) -> Self {
        let mut s = Self::reference();
        match target {
            AuditTarget::LocalLoss => s.local_loss = |n, a, b| flip(local_loss(n, a, b)),
            AuditTarget::KdGradStudent => s.kd_grad_student = |t, x, tau| flip_vec(kd_grad_student(t, x, tau)),
            AuditTarget::KdGradTeacher => s.kd_grad_teacher = |t, x, tau| flip_vec(kd_grad_teacher(t, x, tau)),
            AuditTarget::EnsembleKdLoss => {
                s.ensemble_kd_loss = |n, t, w, x, tau| flip(ensemble_kd_loss(n, t, w, x, tau))
            }
            AuditTarget::IndividualKdStudent => {
                s.individual_kd_loss = |n, t, w, x, tau, side| {
                    let r = individual_kd_loss(n, t, w, x, tau, side);
                    if side == KdSide::Student {
                        flip(r)
                    } else {
                        r
                    }
                }
            }
            AuditTarget::IndividualKdTeacher => {
                s.individual_kd_loss = |n, t, w, x, tau, side| {
                    let r = individual_kd_loss(n, t, w, x, tau, side);
                    if side == KdSide::Teacher {
                        flip(r)
                    } else {
                        r
                    }
                }
            }
            AuditTarget::PersonalObjective => {
                s.personal_objective = |n, v, w, b, l| flip(personal_objective(n, v, w, b, l))
            }
            AuditTarget::RelaxedObjectiveTheta => {
                s.relaxed_global_objective = |n, t, w, b, x, beta, tau| {
                    relaxed_global_objective(n, t, w, b, x, beta, tau).map(|mut r| {
                        r.grad_theta = r.grad_theta.scale(-1.0);
                        r
                    })
                }
            }
            AuditTarget::RelaxedObjectiveW => {
                s.relaxed_global_objective = |n, t, w, b, x, beta, tau| {
                    relaxed_global_objective(n, t, w, b, x, beta, tau).map(|mut r| {
                        r.grad_w = r.grad_w.scale(-1.0);
                        r
                    })
                }
            }
        }
        s
    }
}

fn flip(r: AdapterGrad) -> AdapterGrad {
    r.map(|(l, g)| (l, g.scale(-1.0)))
}

fn flip_vec(r: Result<Vec<f64>>) -> Result<Vec<f64>> {
    r.map(|g| g.into_iter().map(|x| -x).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub target: AuditTarget,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub worst_coordinate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn failures(&self) -> Vec<&AuditEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Small network used by the audit: every layer type and a head delta.
pub fn audit_spec() -> NetSpec {
    NetSpec {
        input_dim: 5,
        hidden_dims: vec![6, 5],
        num_classes: 4,
        adapter_rank: 2,
        adapter_positions: vec![0, 1],
        adapter_includes_head: true,
    }
}

struct Instance {
    net: AdapterNet,
    /// Four random adapters: two teachers, a student/global and a personal one.
    params: [AdapterParams; 4],
    batch: Batch,
    aux: Matrix,
    tau: f64,
    lambda: f64,
    beta: f64,
    teacher_logits: Vec<f64>,
    student_logits: Vec<f64>,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent shape")
}

fn draw_instance(index: usize, seed: u64) -> Result<Instance> {
    let spec = audit_spec();
    for attempt in 0..100u64 {
        let mut rng = stream_rng(seed, Stream::Check, &[2, index as u64, attempt]);
        let backbone = build_backbone(&spec, &mut rng)?;
        let net = AdapterNet::new(&backbone)?;
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let mut adapter = || ParamVector::from_vec((0..net.trainable_len()).map(|_| normal.sample(&mut rng)).collect());
        let params = [adapter(), adapter(), adapter(), adapter()];
        let inputs = random_matrix(6, spec.input_dim, &mut rng);
        let labels = (0..6).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let batch = Batch::labeled(inputs, labels)?;
        let aux = random_matrix(5, spec.input_dim, &mut rng);
        let mut kinked = false;
        for p in &params {
            for x in [&batch.inputs, &aux] {
                kinked |= net.forward(p, x)?.1.min_abs_preactivation() < KINK_GUARD;
            }
        }
        if kinked {
            continue;
        }
        let k = spec.num_classes;
        let mut logits = || (0..k).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>();
        let teacher_logits = logits();
        let student_logits = logits();
        return Ok(Instance {
            net,
            params,
            batch,
            aux,
            tau: [0.5, 1.0, 2.0][rng.random_range(0..3)],
            lambda: rng.random_range(0.1..2.0),
            beta: rng.random_range(0.1..2.0),
            teacher_logits,
            student_logits,
        });
    }
    Err(Error::invalid("could not draw a kink-free audit instance"))
}

fn check<F>(analytic: &[f64], loss: F, at: &ParamVector) -> (f64, usize)
where
    F: Fn(&ParamVector) -> f64,
{
    let numeric = finite_diff_grad(loss, at, AUDIT_EPS);
    relative_error(analytic, numeric.as_slice(), ERROR_FLOOR)
}

fn audit_one(suite: &GradientSuite, target: AuditTarget, inst: &Instance) -> Result<(f64, usize)> {
    let net = &inst.net;
    let [t1, t2, w, v] = &inst.params;
    let (b, x, tau) = (&inst.batch, &inst.aux, inst.tau);
    let value = |r: AdapterGrad| r.map(|(l, _)| l).unwrap_or(f64::NAN);
    Ok(match target {
        AuditTarget::LocalLoss => {
            let (_, g) = (suite.local_loss)(net, w, b)?;
            check(g.as_slice(), |p| value((suite.local_loss)(net, p, b)), w)
        }
        AuditTarget::KdGradStudent => {
            let (a, s) = (&inst.teacher_logits, &inst.student_logits);
            let g = (suite.kd_grad_student)(a, s, tau)?;
            check(&g, |p| kd_loss(a, p.as_slice(), tau).unwrap_or(f64::NAN), &s.clone().into())
        }
        AuditTarget::KdGradTeacher => {
            let (a, s) = (&inst.teacher_logits, &inst.student_logits);
            let g = (suite.kd_grad_teacher)(a, s, tau)?;
            check(&g, |p| kd_loss(p.as_slice(), s, tau).unwrap_or(f64::NAN), &a.clone().into())
        }
        AuditTarget::EnsembleKdLoss => {
            let teachers = [t1.clone(), t2.clone()];
            let (_, g) = (suite.ensemble_kd_loss)(net, &teachers, w, x, tau)?;
            check(g.as_slice(), |p| value((suite.ensemble_kd_loss)(net, &teachers, p, x, tau)), w)
        }
        AuditTarget::IndividualKdStudent => {
            let (_, g) = (suite.individual_kd_loss)(net, t1, w, x, tau, KdSide::Student)?;
            check(
                g.as_slice(),
                |p| value((suite.individual_kd_loss)(net, t1, p, x, tau, KdSide::Student)),
                w,
            )
        }
        AuditTarget::IndividualKdTeacher => {
            let (_, g) = (suite.individual_kd_loss)(net, t1, w, x, tau, KdSide::Teacher)?;
            check(
                g.as_slice(),
                |p| value((suite.individual_kd_loss)(net, p, w, x, tau, KdSide::Teacher)),
                t1,
            )
        }
        AuditTarget::PersonalObjective => {
            let (_, g) = (suite.personal_objective)(net, v, w, b, inst.lambda)?;
            check(g.as_slice(), |p| value((suite.personal_objective)(net, p, w, b, inst.lambda)), v)
        }
        AuditTarget::RelaxedObjectiveTheta | AuditTarget::RelaxedObjectiveW => {
            let f = suite.relaxed_global_objective;
            let r = f(net, t1, w, b, x, inst.beta, tau)?;
            let loss_at = |theta: &ParamVector, ww: &ParamVector| {
                f(net, theta, ww, b, x, inst.beta, tau).map(|r| r.loss).unwrap_or(f64::NAN)
            };
            if target == AuditTarget::RelaxedObjectiveTheta {
                check(r.grad_theta.as_slice(), |p| loss_at(p, w), t1)
            } else {
                check(r.grad_w.as_slice(), |p| loss_at(t1, p), w)
            }
        }
    })
}

/// Audits the reference kernels on 100 random instances per target.
pub fn gradient_audit(tolerance: f64) -> Result<AuditReport> {
    gradient_audit_with(&GradientSuite::reference(), tolerance, 100, 0)
}

pub fn gradient_audit_with(suite: &GradientSuite, tolerance: f64, instances: usize, seed: u64) -> Result<AuditReport> {
    if instances == 0 {
        return Err(Error::invalid("gradient audit needs >= 1 instance"));
    }
    let drawn = (0..instances)
        .map(|i| draw_instance(i, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(AuditTarget::ALL.len());
    for target in AuditTarget::ALL {
        let mut entry = AuditEntry {
            target,
            instances,
            max_rel_error: 0.0,
            worst_instance: 0,
            worst_coordinate: 0,
        };
        for (i, inst) in drawn.iter().enumerate() {
            let (err, coord) = audit_one(suite, target, inst)?;
            if !(err <= entry.max_rel_error) {
                entry.max_rel_error = err;
                entry.worst_instance = i;
                entry.worst_coordinate = coord;
            }
        }
        entries.push(entry);
    }
    Ok(AuditReport { tolerance, entries })
}

//! Losses and objectives with their analytic gradients.
//!
//! All per-sample losses are averaged over the batch (or distillation batch),
//! so step sizes do not depend on batch size. Teacher logits are constants in
//! every distillation gradient unless the teacher side is requested
//! explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterNet, AdapterParams};
use crate::tensor_nn::{check_tau, log_softmax_unchecked, softmax_unchecked, Batch, Matrix, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
            tau: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::invalid("lambda and beta must be >= 0"));
        }
        check_tau(self.tau)
    }
}

/// Which argument of the distillation loss to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdSide {
    Student,
    Teacher,
}

impl std::str::FromStr for KdSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(KdSide::Student),
            "teacher" => Ok(KdSide::Teacher),
            other => Err(Error::invalid(format!(
                "wrt must be `student` or `teacher`, got `{other}`"
            ))),
        }
    }
}

/// Mean cross-entropy from logits, and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("cross_entropy labels", logits.rows(), labels.len()));
    }
    let n = logits.rows() as f64;
    let k = logits.cols();
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let logp = log_softmax_unchecked(logits.row(i), 1.0);
        loss -= logp[y];
        let g = grad.row_mut(i);
        for (c, lp) in logp.iter().enumerate() {
            g[c] = lp.exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// `L_m`: mean cross-entropy on a labeled batch; gradient over the adapter.
pub fn local_loss(
    net: &AdapterNet,
    adapter: &AdapterParams,
    batch: &Batch,
) -> Result<(f64, AdapterParams)> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("local_loss needs a labeled batch"))?;
    let (logits, tape) = net.forward(adapter, &batch.inputs)?;
    let (loss, up) = cross_entropy(&logits, labels)?;
    Ok((loss, net.backward(&tape, &up)?))
}

fn check_pair(teacher: &[f64], student: &[f64], tau: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::shape("kd logits", teacher.len(), student.len()));
    }
    check_tau(tau)
}

fn kl_unchecked(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let lp = log_softmax_unchecked(teacher, tau);
    let lq = log_softmax_unchecked(student, tau);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// `KL(σ(teacher/τ) ‖ σ(student/τ))`, without a τ² factor.
pub fn kd_loss(teacher: &[f64], student: &[f64], tau: f64) -> Result<f64> {
    check_pair(teacher, student, tau)?;
    Ok(kl_unchecked(teacher, student, tau))
}

/// `∂ kd_loss / ∂ student = (σ(student/τ) − σ(teacher/τ)) / τ`.
pub fn kd_grad_student(teacher: &[f64], student: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_pair(teacher, student, tau)?;
    Ok(kd_grad_student_unchecked(teacher, student, tau))
}

fn kd_grad_student_unchecked(teacher: &[f64], student: &[f64], tau: f64) -> Vec<f64> {
    let p = softmax_unchecked(teacher, tau);
    let q = softmax_unchecked(student, tau);
    q.iter().zip(&p).map(|(qi, pi)| (qi - pi) / tau).collect()
}

/// `∂ kd_loss / ∂ teacher_i = p_i (log p_i − log q_i − KL) / τ`.
pub fn kd_grad_teacher(teacher: &[f64], student: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_pair(teacher, student, tau)?;
    let lp = log_softmax_unchecked(teacher, tau);
    let lq = log_softmax_unchecked(student, tau);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
    Ok(p.iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pi, (a, b))| pi * (a - b - kl) / tau)
        .collect())
}

/// Row-wise mean of several logit matrices (the ensemble teacher).
pub fn mean_logits(sets: &[Matrix]) -> Result<Matrix> {
    let first = sets.first().ok_or(Error::Empty("teacher list"))?;
    let mut out = first.clone();
    let n = sets.len() as f64;
    for s in &sets[1..] {
        if s.shape() != first.shape() {
            return Err(Error::shape("mean_logits", first.shape(), s.shape()));
        }
    }
    for (j, o) in out.as_mut_slice().iter_mut().enumerate() {
        let base = first.as_slice()[j];
        let dev: f64 = sets[1..].iter().map(|s| s.as_slice()[j] - base).sum();
        *o = base + dev / n;
    }
    Ok(out)
}

/// Mean KD loss over rows and its gradient w.r.t. the student logits.
pub(crate) fn kd_student_upstream(teacher: &Matrix, student: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape("teacher vs student logits", teacher.shape(), student.shape()));
    }
    check_tau(tau)?;
    let n = student.rows() as f64;
    let mut up = Matrix::zeros(student.rows(), student.cols());
    let mut loss = 0.0;
    for i in 0..student.rows() {
        let (t, s) = (teacher.row(i), student.row(i));
        loss += kl_unchecked(t, s, tau);
        for (u, g) in up.row_mut(i).iter_mut().zip(kd_grad_student_unchecked(t, s, tau)) {
            *u = g / n;
        }
    }
    Ok((loss / n, up))
}

/// Mean KD loss over rows and its gradient w.r.t. the teacher logits.
pub(crate) fn kd_teacher_upstream(teacher: &Matrix, student: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape("teacher vs student logits", teacher.shape(), student.shape()));
    }
    check_tau(tau)?;
    let n = teacher.rows() as f64;
    let mut up = Matrix::zeros(teacher.rows(), teacher.cols());
    let mut loss = 0.0;
    for i in 0..teacher.rows() {
        let (t, s) = (teacher.row(i), student.row(i));
        loss += kl_unchecked(t, s, tau);
        for (u, g) in up.row_mut(i).iter_mut().zip(kd_grad_teacher(t, s, tau)?) {
            *u = g / n;
        }
    }
    Ok((loss / n, up))
}

/// Mean KD loss of the student against fixed teacher logits on `inputs`,
/// with the gradient w.r.t. the student adapter.
pub fn kd_against_logits(
    net: &AdapterNet,
    teacher_logits: &Matrix,
    student: &AdapterParams,
    inputs: &Matrix,
    tau: f64,
) -> Result<(f64, AdapterParams)> {
    check_tau(tau)?;
    let (logits, tape) = net.forward(student, inputs)?;
    let (loss, up) = kd_student_upstream(teacher_logits, &logits, tau)?;
    Ok((loss, net.backward(&tape, &up)?))
}

/// `R_KD` averaged over the distillation batch: KD between the mean teacher
/// logits and the student. Gradient w.r.t. the student only.
pub fn ensemble_kd_loss(
    net: &AdapterNet,
    teachers: &[AdapterParams],
    student: &AdapterParams,
    aux: &Matrix,
    tau: f64,
) -> Result<(f64, AdapterParams)> {
    if teachers.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    let sets = teachers
        .iter()
        .map(|t| net.predict(t, aux))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_logits(&sets)?;
    kd_against_logits(net, &mean, student, aux, tau)
}

/// Mean over teachers of per-teacher KD, with the student gradient. Used by the
/// relaxed server rule; the teacher logits are supplied precomputed.
pub fn mean_individual_kd_against_logits(
    net: &AdapterNet,
    teacher_logits: &[Matrix],
    student: &AdapterParams,
    inputs: &Matrix,
    tau: f64,
) -> Result<(f64, AdapterParams)> {
    if teacher_logits.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    check_tau(tau)?;
    let (logits, tape) = net.forward(student, inputs)?;
    let n = logits.rows() as f64;
    let m = teacher_logits.len() as f64;
    let mut up = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for t in teacher_logits {
        if t.shape() != logits.shape() {
            return Err(Error::shape("teacher vs student logits", t.shape(), logits.shape()));
        }
        for i in 0..logits.rows() {
            loss += kl_unchecked(t.row(i), logits.row(i), tau);
            for (u, g) in up
                .row_mut(i)
                .iter_mut()
                .zip(kd_grad_student_unchecked(t.row(i), logits.row(i), tau))
            {
                *u += g / (n * m);
            }
        }
    }
    Ok((loss / (n * m), net.backward(&tape, &up)?))
}

/// `R(u, θ_m, w)` averaged over the distillation batch, differentiated w.r.t.
/// the side named by `wrt`.
pub fn individual_kd_loss(
    net: &AdapterNet,
    teacher: &AdapterParams,
    student: &AdapterParams,
    aux: &Matrix,
    tau: f64,
    wrt: KdSide,
) -> Result<(f64, AdapterParams)> {
    check_tau(tau)?;
    match wrt {
        KdSide::Student => {
            let t = net.predict(teacher, aux)?;
            kd_against_logits(net, &t, student, aux, tau)
        }
        KdSide::Teacher => {
            let (t, tape) = net.forward(teacher, aux)?;
            let s = net.predict(student, aux)?;
            let (loss, up) = kd_teacher_upstream(&t, &s, tau)?;
            Ok((loss, net.backward(&tape, &up)?))
        }
    }
}

/// `P_m(v, w) = L_m((u, v)) + λ/2 ‖v − w‖²`, gradient `∇L_m + λ (v − w)`.
pub fn personal_objective(
    net: &AdapterNet,
    v: &AdapterParams,
    w: &AdapterParams,
    batch: &Batch,
    lambda: f64,
) -> Result<(f64, AdapterParams)> {
    if v.len() != w.len() {
        return Err(Error::shape("personal_objective (v vs w)", v.len(), w.len()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let (loss, mut grad) = local_loss(net, v, batch)?;
    if lambda == 0.0 {
        return Ok((loss, grad));
    }
    let diff = v.sub(w)?;
    grad.axpy(lambda, &diff)?;
    Ok((loss + 0.5 * lambda * diff.norm_sq(), grad))
}

/// Value and both gradients of `F_m(θ, w) = L_m((u, θ)) + β R(u, θ, w)`.
#[derive(Debug, Clone)]
pub struct RelaxedObjective {
    pub loss: f64,
    pub grad_theta: AdapterParams,
    pub grad_w: AdapterParams,
}

pub fn relaxed_global_objective(
    net: &AdapterNet,
    theta: &AdapterParams,
    w: &AdapterParams,
    batch: &Batch,
    aux: &Matrix,
    beta: f64,
    tau: f64,
) -> Result<RelaxedObjective> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    let (l, mut grad_theta) = local_loss(net, theta, batch)?;
    if beta == 0.0 {
        return Ok(RelaxedObjective {
            loss: l,
            grad_theta,
            grad_w: ParamVector::zeros(w.len()),
        });
    }
    let (r, g_teacher) = individual_kd_loss(net, theta, w, aux, tau, KdSide::Teacher)?;
    let (_, g_student) = individual_kd_loss(net, theta, w, aux, tau, KdSide::Student)?;
    grad_theta.axpy(beta, &g_teacher)?;
    Ok(RelaxedObjective {
        loss: l + beta * r,
        grad_theta,
        grad_w: g_student.scale(beta),
    })
}

/// `mean_m ℓ_KD(a_m, b) − ℓ_KD(mean_m a_m, b)`; nonnegative by convexity.
///
/// Means are taken as `x_0 + Σ (x_m − x_0) / M` so that identical teachers
/// yield a gap of exactly zero.
pub fn relaxation_gap(teachers: &[Vec<f64>], student: &[f64], tau: f64) -> Result<f64> {
    let first = teachers.first().ok_or(Error::Empty("teacher list"))?;
    let m = teachers.len() as f64;
    let losses = teachers
        .iter()
        .map(|a| kd_loss(a, student, tau))
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = losses[0] + losses[1..].iter().map(|l| l - losses[0]).sum::<f64>() / m;
    let mean_teacher: Vec<f64> = (0..first.len())
        .map(|j| first[j] + teachers[1..].iter().map(|a| a[j] - first[j]).sum::<f64>() / m)
        .collect();
    Ok(mean_loss - kd_loss(&mean_teacher, student, tau)?)
}

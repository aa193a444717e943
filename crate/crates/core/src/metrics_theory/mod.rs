//! Evaluation metrics and runtime diagnostics tied to the convergence and
//! generalization analysis.

mod audit;
mod relaxation;

use serde::Serialize;

use crate::data::{CorruptionKind, FederatedDataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{AdapterNet, AdapterParams};
use crate::objectives::{kd_student_upstream, kd_teacher_upstream, local_loss, personal_objective};
use crate::tensor_nn::{softmax_unchecked, Matrix, ParamVector};

pub use audit::{gradient_audit, gradient_audit_with, AuditEntry, AuditReport, AuditTarget, GradientSuite};
pub use relaxation::{check_relaxation_sweep, RelaxationReport, RelaxationSweep};

pub use crate::fl_runtime::StationarityRecord;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(net: &AdapterNet, adapter: &AdapterParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let logits = net.predict(adapter, data.inputs())?;
    Ok(accuracy_from_logits(&logits, data.labels()))
}

pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientEval {
    pub client: usize,
    /// Personalized model on its own local-test split.
    pub local: f64,
    /// Personalized model on the pooled global test set.
    pub global: f64,
    /// Global model on this client's local-test split.
    pub global_model_local: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodEval {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Personalized models on the corrupted global test set.
    pub personalized: MeanStd,
    pub global_model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub clients: Vec<ClientEval>,
    pub personalized_local: MeanStd,
    pub personalized_global: MeanStd,
    pub global_model_local: MeanStd,
    pub global_model_global: f64,
    pub ood: Vec<OodEval>,
}

/// Local-test and Global-test accuracy of each personalized model and of the
/// global model, plus every OOD set in `data`.
pub fn evaluate_all(
    net: &AdapterNet,
    global: &AdapterParams,
    personal: &[AdapterParams],
    data: &FederatedDataset,
) -> Result<EvalReport> {
    if personal.len() != data.num_clients() {
        return Err(Error::shape("personal models vs clients", personal.len(), data.num_clients()));
    }
    let global_logits = net.predict(global, data.global_test.inputs())?;
    let global_model_global = accuracy_from_logits(&global_logits, data.global_test.labels());
    let mut clients = Vec::with_capacity(personal.len());
    for (client, v) in data.clients.iter().zip(personal) {
        clients.push(ClientEval {
            client: client.id,
            local: accuracy(net, v, &client.test)?,
            global: accuracy(net, v, &data.global_test)?,
            global_model_local: accuracy(net, global, &client.test)?,
        });
    }
    let col = |f: fn(&ClientEval) -> f64| MeanStd::of(&clients.iter().map(f).collect::<Vec<_>>());
    let mut ood = Vec::with_capacity(data.ood.len());
    for set in &data.ood {
        let per = personal
            .iter()
            .map(|v| accuracy(net, v, &set.data))
            .collect::<Result<Vec<_>>>()?;
        ood.push(OodEval {
            kind: set.kind,
            severity: set.severity,
            personalized: MeanStd::of(&per),
            global_model: accuracy(net, global, &set.data)?,
        });
    }
    Ok(EvalReport {
        personalized_local: col(|c| c.local),
        personalized_global: col(|c| c.global),
        global_model_local: col(|c| c.global_model_local),
        global_model_global,
        clients,
        ood,
    })
}

fn check_nonempty(m: &Matrix) -> Result<()> {
    if m.rows() == 0 {
        return Err(Error::Empty("probe inputs"));
    }
    Ok(())
}

/// `(1/n) Σ_i ‖σ(student_i) − (1/M) Σ_m σ(teacher_m,i)‖₁` at temperature 1.
pub fn distillation_distance_from_logits(teachers: &[Matrix], student: &Matrix) -> Result<f64> {
    if teachers.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    check_nonempty(student)?;
    for t in teachers {
        if t.shape() != student.shape() {
            return Err(Error::shape("distillation distance logits", t.shape(), student.shape()));
        }
    }
    let m = teachers.len() as f64;
    let mut total = 0.0;
    for i in 0..student.rows() {
        let mut ensemble = vec![0.0; student.cols()];
        for t in teachers {
            for (e, p) in ensemble.iter_mut().zip(softmax_unchecked(t.row(i), 1.0)) {
                *e += p / m;
            }
        }
        let q = softmax_unchecked(student.row(i), 1.0);
        total += q.iter().zip(&ensemble).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / student.rows() as f64)
}

pub fn distillation_distance(
    net: &AdapterNet,
    teachers: &[AdapterParams],
    student: &AdapterParams,
    inputs: &Matrix,
) -> Result<f64> {
    let logits = teachers
        .iter()
        .map(|t| net.predict(t, inputs))
        .collect::<Result<Vec<_>>>()?;
    distillation_distance_from_logits(&logits, &net.predict(student, inputs)?)
}

/// `(1/n) Σ_i min{1, ‖σ(f_v(x_i)) − σ(f_w(x_i))‖₁}` at temperature 1.
pub fn prediction_distance(net: &AdapterNet, v: &AdapterParams, w: &AdapterParams, inputs: &Matrix) -> Result<f64> {
    check_nonempty(inputs)?;
    let a = net.predict(v, inputs)?;
    let b = net.predict(w, inputs)?;
    let total: f64 = a
        .iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| {
            let p = softmax_unchecked(x, 1.0);
            let q = softmax_unchecked(y, 1.0);
            p.iter().zip(&q).map(|(s, t)| (s - t).abs()).sum::<f64>().min(1.0)
        })
        .sum();
    Ok(total / inputs.rows() as f64)
}

/// Mean over clients of [`prediction_distance`] between each personalized
/// model and the global model, probed on the global test inputs.
pub fn mean_prediction_distance(
    net: &AdapterNet,
    personal: &[AdapterParams],
    global: &AdapterParams,
    data: &FederatedDataset,
) -> Result<f64> {
    if personal.is_empty() {
        return Err(Error::Empty("personal model list"));
    }
    let mut total = 0.0;
    for v in personal {
        total += prediction_distance(net, v, global, data.global_test.inputs())?;
    }
    Ok(total / personal.len() as f64)
}

/// Iterates entering one round's stationarity measurement, one entry per
/// client for the per-client lists.
pub struct StationarityInputs<'a> {
    pub global_prev: &'a AdapterParams,
    pub local_prev: Vec<&'a AdapterParams>,
    pub local_next: Vec<&'a AdapterParams>,
    pub personal_prev: Vec<&'a AdapterParams>,
    pub personal_next: Vec<&'a AdapterParams>,
}

/// Full-batch stationarity measures over all clients, with the relaxed
/// objective `F_m = L_m + β R(θ, w)` on the whole distillation pool and
/// `P_m = L_m + λ/2 ‖v − w‖²`.
pub fn stationarity(
    net: &AdapterNet,
    data: &FederatedDataset,
    inputs: &StationarityInputs<'_>,
    lambda: f64,
    beta: f64,
    tau: f64,
) -> Result<StationarityRecord> {
    let m = data.num_clients();
    for len in [
        inputs.local_prev.len(),
        inputs.local_next.len(),
        inputs.personal_prev.len(),
        inputs.personal_next.len(),
    ] {
        if len != m {
            return Err(Error::shape("stationarity per-client inputs", m, len));
        }
    }
    let w = inputs.global_prev;
    let pool = data.distill_pool.inputs();
    let student = if beta > 0.0 { Some(net.forward(w, pool)?) } else { None };
    let mut global_total = 0.0;
    let mut personal_total = 0.0;
    for (c, client) in data.clients.iter().enumerate() {
        let batch = client.train.batch();
        let theta_prev = inputs.local_prev[c];
        let theta_next = inputs.local_next[c];
        let (_, mut g_theta) = local_loss(net, theta_prev, &batch)?;
        let mut g_w = ParamVector::zeros(w.len());
        if let Some((s_logits, s_tape)) = &student {
            let (t_logits, t_tape) = net.forward(theta_prev, pool)?;
            let (_, up) = kd_teacher_upstream(&t_logits, s_logits, tau)?;
            g_theta.axpy(beta, &net.backward(&t_tape, &up)?)?;
            let next_logits = if theta_next.bitwise_eq(theta_prev) {
                t_logits
            } else {
                net.predict(theta_next, pool)?
            };
            let (_, up) = kd_student_upstream(&next_logits, s_logits, tau)?;
            g_w = net.backward(s_tape, &up)?.scale(beta);
        }
        global_total += g_theta.norm_sq() + g_w.norm_sq();

        let (_, g_v) = personal_objective(net, inputs.personal_prev[c], w, &batch, lambda)?;
        let g_wp = w.sub(inputs.personal_next[c])?.scale(lambda);
        personal_total += g_v.norm_sq() + g_wp.norm_sq();
    }
    Ok(StationarityRecord {
        global: global_total / m as f64,
        personal: personal_total / m as f64,
    })
}

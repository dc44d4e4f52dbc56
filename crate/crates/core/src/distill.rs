//! Inter-stage correlation-map distillation.
//!
//! Each stage's correlation map is reduced to a per-query-position score by
//! a support-mask-filtered mean, softmaxed over all positions with a
//! temperature, and supervised by KL divergence from the next deeper stage
//! (resized and renormalized, gradient-detached). The deepest stage has no
//! successor and is supervised by the downsampled ground-truth query mask.

use crate::matching::CorrelationMap;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct DistillConfig<S: Scalar> {
    pub temperature: S,
    /// Rescale each pair loss by T^2 (classic distillation convention),
    /// off by default.
    pub t2_scaling: bool,
}

impl<S: Scalar> Default for DistillConfig<S> {
    fn default() -> Self {
        Self {
            temperature: S::one(),
            t2_scaling: false,
        }
    }
}

/// Mean of each query row over support columns selected by the mask:
/// `C'(i) = mean_{j : sel(j) > 0} C(i, j)`.
pub fn reduce_map<S: Scalar>(
    tape: &mut Tape<S>,
    map: Var,
    support_sel: &Tensor<S>,
) -> Result<Var> {
    let (nq, ns) = {
        let v = tape.value(map);
        (v.shape()[0], v.shape()[1])
    };
    if support_sel.numel() != ns {
        return Err(TensorError::ShapeMismatch {
            op: "reduce_map",
            lhs: vec![nq, ns],
            rhs: support_sel.shape().to_vec(),
        });
    }
    let count = support_sel.data().iter().filter(|&&v| v > S::zero()).count();
    if count == 0 {
        return Err(TensorError::EmptyMask { op: "reduce_map" });
    }
    let inv = S::from_f64(1.0 / count as f64);
    let weights: Vec<S> = support_sel
        .data()
        .iter()
        .map(|&v| if v > S::zero() { inv } else { S::zero() })
        .collect();
    let w = tape.constant(Tensor::from_vec(vec![ns, 1], weights)?);
    let col = tape.matmul(map, w)?;
    tape.reshape(col, &[nq])
}

/// Temperature softmax over all positions of the reduced map.
pub fn spatial_softmax<S: Scalar>(tape: &mut Tape<S>, reduced: Var, temperature: S) -> Result<Var> {
    let scaled = tape.scalar_mul(reduced, S::one() / temperature)?;
    tape.softmax(scaled, 0)
}

/// KL divergence of a constant teacher distribution from the student.
pub fn kl_pair_loss<S: Scalar>(tape: &mut Tape<S>, teacher: &Tensor<S>, student: Var) -> Result<Var> {
    tape.kl_div(teacher, student)
}

/// Resize a flat distribution between stage grids (bilinear) and
/// renormalize it to sum 1.
pub fn resize_distribution<S: Scalar>(
    dist: &Tensor<S>,
    from_hw: (usize, usize),
    to_hw: (usize, usize),
) -> Result<Tensor<S>> {
    let grid = dist.reshaped(vec![1, from_hw.0, from_hw.1])?;
    let resized = tensor::bilinear_resize3(&grid, to_hw.0, to_hw.1)?;
    let total: S = resized.data().iter().copied().sum();
    Ok(tensor::scale(&resized, S::one() / total).reshaped(vec![to_hw.0 * to_hw.1])?)
}

/// Ground-truth teacher for the deepest stage: area-average the query mask
/// down to the stage grid and normalize to a distribution.
pub fn ground_truth_teacher<S: Scalar>(
    query_mask: &Tensor<S>,
    stage_hw: (usize, usize),
) -> Result<Tensor<S>> {
    let pooled = tensor::area_downsample(query_mask, stage_hw.0, stage_hw.1)?;
    let total: S = pooled.data().iter().copied().sum();
    if total <= S::zero() {
        return Err(TensorError::EmptyMask {
            op: "ground_truth_teacher",
        });
    }
    Ok(tensor::scale(&pooled, S::one() / total).reshaped(vec![stage_hw.0 * stage_hw.1])?)
}

/// Reduce and softmax every stage's map into its student distribution.
pub fn student_distributions<S: Scalar>(
    tape: &mut Tape<S>,
    maps: &[CorrelationMap],
    stage_sels: &[Tensor<S>],
    cfg: &DistillConfig<S>,
) -> Result<Vec<Var>> {
    assert_eq!(maps.len(), stage_sels.len());
    maps.iter()
        .zip(stage_sels)
        .map(|(map, sel)| {
            let reduced = reduce_map(tape, map.values, sel)?;
            spatial_softmax(tape, reduced, cfg.temperature)
        })
        .collect()
}

/// Teacher of pair `l`: the next deeper student's value, resized down and
/// renormalized; the deepest pair gets the ground-truth mask distribution.
/// Taken by value, so no gradient ever flows through a teacher.
pub fn teacher_distributions<S: Scalar>(
    tape: &Tape<S>,
    students: &[Var],
    stage_hw: &[(usize, usize)],
    query_mask: &Tensor<S>,
) -> Result<Vec<Tensor<S>>> {
    let levels = students.len();
    let mut teachers = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        teachers.push(resize_distribution(
            tape.value(students[l + 1]),
            stage_hw[l + 1],
            stage_hw[l],
        )?);
    }
    teachers.push(ground_truth_teacher(query_mask, stage_hw[levels - 1])?);
    Ok(teachers)
}

/// Sum of per-pair KL losses against fixed teacher distributions.
pub fn pair_loss_sum<S: Scalar>(
    tape: &mut Tape<S>,
    students: &[Var],
    teachers: &[Tensor<S>],
    cfg: &DistillConfig<S>,
) -> Result<Var> {
    assert!(!students.is_empty());
    assert_eq!(students.len(), teachers.len());
    let pair_scale = if cfg.t2_scaling {
        cfg.temperature * cfg.temperature
    } else {
        S::one()
    };
    let mut total: Option<Var> = None;
    for (student, teacher) in students.iter().zip(teachers) {
        let mut loss = kl_pair_loss(tape, teacher, *student)?;
        if pair_scale != S::one() {
            loss = tape.scalar_mul(loss, pair_scale)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    Ok(total.expect("at least one pair"))
}

/// Assemble the distillation loss over all stages. `stage_hw[l]` is the
/// query grid of stage `l`; `stage_sels[l]` selects the masked support
/// columns of stage `l`'s map. Teachers are detached, so gradients flow
/// only through each pair's student.
pub fn distill_loss<S: Scalar>(
    tape: &mut Tape<S>,
    maps: &[CorrelationMap],
    stage_hw: &[(usize, usize)],
    stage_sels: &[Tensor<S>],
    query_mask: &Tensor<S>,
    cfg: &DistillConfig<S>,
) -> Result<Var> {
    assert_eq!(maps.len(), stage_hw.len());
    let students = student_distributions(tape, maps, stage_sels, cfg)?;
    let teachers = teacher_distributions(tape, &students, stage_hw, query_mask)?;
    pair_loss_sum(tape, &students, &teachers, cfg)
}
